//! Synthetic supervision: procedural panoramas, region selection, query augmentation,
//! reference-mask targets and derangement negatives.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::GeoPoint;
use crate::image::Image;
use crate::localize::{BoundingBox, Grid};
use crate::manifest::random_matching;

pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);
/// Open interval; both ends excluded.
pub const SHIFT_LIMIT: f64 = 0.2;
pub const GAMMA_RANGE: (f64, f64) = (0.5, 1.5);
/// Corner displacement bound, as a fraction of the window extents.
pub const CORNER_LIMIT: f64 = 0.1;
pub const AREA_RANGE: (f64, f64) = (0.04, 0.25);
pub const ASPECT_RANGE: (f64, f64) = (0.5, 2.0);
pub const MIN_PANORAMA_EXTENT: usize = 64;
pub const DEFAULT_COVERAGE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub gamma: f64,
    /// `(dx, dy)` for the top-left, top-right, bottom-right and bottom-left corners.
    pub corners: [[f64; 2]; 4],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            gamma: 1.0,
            corners: [[0.0; 2]; 4],
        }
    }

    /// Scale is log-uniform so zooming in and out are equally likely.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let (lo, hi) = SCALE_RANGE;
        let scale = rng.gen_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi);
        let mut shift = || loop {
            let s = rng.gen_range(-SHIFT_LIMIT..SHIFT_LIMIT);
            if s > -SHIFT_LIMIT {
                break s;
            }
        };
        let (shift_x, shift_y) = (shift(), shift());
        let gamma = rng.gen_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
        let mut corners = [[0.0; 2]; 4];
        for c in corners.iter_mut().flatten() {
            *c = rng.gen_range(-CORNER_LIMIT..=CORNER_LIMIT);
        }
        AugmentParams {
            scale,
            shift_x,
            shift_y,
            gamma,
            corners,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale)
            && self.shift_x.abs() < SHIFT_LIMIT
            && self.shift_y.abs() < SHIFT_LIMIT
            && (GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&self.gamma)
            && self
                .corners
                .iter()
                .flatten()
                .all(|c| c.abs() <= CORNER_LIMIT);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "augmentation parameters out of range: {self:?}"
            )))
        }
    }
}

/// Projective map of the unit square onto the quad whose corners are displaced by
/// `corners` (square-to-quad closed form).
#[derive(Clone, Copy, Debug)]
struct Homography([f64; 8]);

impl Homography {
    fn square_to_quad(corners: &[[f64; 2]; 4]) -> Self {
        let base = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let p: Vec<[f64; 2]> = base
            .iter()
            .zip(corners)
            .map(|(b, d)| [b[0] + d[0], b[1] + d[1]])
            .collect();
        let (x0, y0, x1, y1, x2, y2, x3, y3) = (
            p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1], p[3][0], p[3][1],
        );
        let (sx, sy) = (x0 - x1 + x2 - x3, y0 - y1 + y2 - y3);
        if sx == 0.0 && sy == 0.0 {
            return Homography([x1 - x0, x2 - x1, x0, y1 - y0, y2 - y1, y0, 0.0, 0.0]);
        }
        let (dx1, dx2, dy1, dy2) = (x1 - x2, x3 - x2, y1 - y2, y3 - y2);
        let den = dx1 * dy2 - dx2 * dy1;
        let g = (sx * dy2 - dx2 * sy) / den;
        let h = (dx1 * sy - sx * dy1) / den;
        Homography([
            x1 - x0 + g * x1,
            x3 - x0 + h * x3,
            x0,
            y1 - y0 + g * y1,
            y3 - y0 + h * y3,
            y0,
            g,
            h,
        ])
    }

    fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let [a, b, c, d, e, f, g, h] = self.0;
        let w = g * u + h * v + 1.0;
        ((a * u + b * v + c) / w, (d * u + e * v + f) / w)
    }
}

/// Picks one candidate uniformly, or without candidates a random box with area in
/// 4–25% of the panorama and aspect (width / height) in [0.5, 2]. Boxes may cross the seam.
pub fn select_region(
    pano_height: usize,
    pano_width: usize,
    candidates: Option<&[BoundingBox]>,
    rng: &mut impl Rng,
) -> Result<BoundingBox> {
    if pano_height < MIN_PANORAMA_EXTENT || pano_width < MIN_PANORAMA_EXTENT {
        return Err(Error::invalid(format!(
            "panorama {pano_height}x{pano_width} is smaller than {MIN_PANORAMA_EXTENT}x{MIN_PANORAMA_EXTENT}"
        )));
    }
    if let Some(list) = candidates {
        if list.is_empty() {
            return Err(Error::invalid("candidate list is empty"));
        }
        return Ok(list[rng.gen_range(0..list.len())]);
    }
    let total = (pano_height * pano_width) as f64;
    for _ in 0..10_000 {
        let area = rng.gen_range(AREA_RANGE.0..=AREA_RANGE.1) * total;
        let aspect = rng
            .gen_range(ASPECT_RANGE.0.ln()..=ASPECT_RANGE.1.ln())
            .exp();
        let w = (area * aspect).sqrt().round() as usize;
        let h = (area / aspect).sqrt().round() as usize;
        let frac = (w * h) as f64 / total;
        let ratio = w as f64 / h.max(1) as f64;
        if w == 0
            || h == 0
            || w > pano_width
            || h > pano_height
            || !(AREA_RANGE.0..=AREA_RANGE.1).contains(&frac)
            || !(ASPECT_RANGE.0..=ASPECT_RANGE.1).contains(&ratio)
        {
            continue;
        }
        let x0 = rng.gen_range(0..pano_width);
        let y0 = rng.gen_range(0..=pano_height - h);
        return Ok(BoundingBox {
            x0,
            y0,
            width: w,
            height: h,
            wrap: x0 + w > pano_width,
        });
    }
    Err(Error::invalid(
        "could not sample a region for this panorama",
    ))
}

/// The integer window a region and parameters sample from: extents scaled (and capped
/// at the panorama extents), centre displaced by the shift fractions of the region
/// extents, rows kept inside the panorama, columns wrapping.
pub fn sample_window(
    region: &BoundingBox,
    params: &AugmentParams,
    pano_height: usize,
    pano_width: usize,
) -> BoundingBox {
    let (bw, bh) = (region.width as f64, region.height as f64);
    let ww = ((params.scale * bw).round() as usize).clamp(1, pano_width);
    let wh = ((params.scale * bh).round() as usize).clamp(1, pano_height);
    let cx = region.x0 as f64 + bw / 2.0 + params.shift_x * bw;
    let cy = region.y0 as f64 + bh / 2.0 + params.shift_y * bh;
    let x0 = ((cx - ww as f64 / 2.0).round() as i64).rem_euclid(pano_width as i64) as usize;
    let y0 = ((cy - wh as f64 / 2.0).round().max(0.0) as usize).min(pano_height - wh);
    BoundingBox {
        x0,
        y0,
        width: ww,
        height: wh,
        wrap: x0 + ww > pano_width,
    }
}

/// Synthesizes a query from a panorama region: perspective warp of the sampled window
/// (bilinear, wrapping horizontally), resized to `out_height x out_width`, then gamma.
/// Returns the query and the window it was sampled from.
pub fn augment(
    panorama: &Image,
    region: &BoundingBox,
    params: &AugmentParams,
    out_height: usize,
    out_width: usize,
) -> Result<(Image, BoundingBox)> {
    params.validate()?;
    if out_height == 0 || out_width == 0 {
        return Err(Error::invalid("query extents must be positive"));
    }
    let window = sample_window(region, params, panorama.height(), panorama.width());
    let hom = Homography::square_to_quad(&params.corners);
    let (ww, wh) = (window.width as f64, window.height as f64);
    let mut data = Vec::with_capacity(out_height * out_width * panorama.channels());
    for i in 0..out_height {
        for j in 0..out_width {
            let u = (j as f64 + 0.5) / out_width as f64;
            let v = (i as f64 + 0.5) / out_height as f64;
            let (px, py) = hom.apply(u, v);
            let x = window.x0 as f64 + px * ww - 0.5;
            let y = window.y0 as f64 + py * wh - 0.5;
            for c in 0..panorama.channels() {
                let s = panorama.sample(y, x, c, true);
                data.push(if params.gamma == 1.0 {
                    s
                } else {
                    s.powf(params.gamma)
                });
            }
        }
    }
    let query = Image::new(out_height, out_width, panorama.channels(), data)?;
    Ok((query, window))
}

/// Feature-resolution target: cell `(r, c)` is set iff at least `coverage` of its
/// `d x d` pixel block lies inside `source` (columns modulo the panorama width).
pub fn mask_target(
    source: &BoundingBox,
    pano_height: usize,
    pano_width: usize,
    d: usize,
    coverage: f64,
) -> Result<Grid> {
    if d == 0 || !pano_height.is_multiple_of(d) || !pano_width.is_multiple_of(d) {
        return Err(Error::invalid(format!(
            "panorama {pano_height}x{pano_width} is not a multiple of {d}"
        )));
    }
    let (h, w) = (pano_height / d, pano_width / d);
    let need = coverage * (d * d) as f64;
    Ok(Grid::from_fn(h, w, |r, c| {
        let top = (r * d).max(source.y0);
        let bottom = ((r + 1) * d).min(source.y0 + source.height);
        let rows = bottom.saturating_sub(top);
        let cols = (c * d..(c + 1) * d)
            .filter(|&x| source.covers_column(x, pano_width))
            .count();
        (rows * cols) as f64 >= need
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub query_size: usize,
    pub downsample_factor: usize,
    pub coverage: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            query_size: 64,
            downsample_factor: 8,
            coverage: DEFAULT_COVERAGE,
        }
    }
}

/// One synthetic positive. Everything except `query` serializes into the dataset's
/// record file; the image itself is stored separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub pano_id: usize,
    pub seed: u64,
    pub region: BoundingBox,
    pub source_box: BoundingBox,
    pub params: AugmentParams,
    #[serde(skip)]
    pub query: Option<Image>,
}

impl SynthRecord {
    pub fn target(
        &self,
        pano_height: usize,
        pano_width: usize,
        d: usize,
        coverage: f64,
    ) -> Result<Grid> {
        mask_target(&self.source_box, pano_height, pano_width, d, coverage)
    }
}

/// Region, augmentation and query for `(pano_id, seed)`; reproducible from those two.
pub fn make_positive(
    panorama: &Image,
    pano_id: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<SynthRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = select_region(panorama.height(), panorama.width(), None, &mut rng)?;
    let params = AugmentParams::sample(&mut rng);
    let (query, source_box) = augment(
        panorama,
        &region,
        &params,
        config.query_size,
        config.query_size,
    )?;
    Ok(SynthRecord {
        pano_id,
        seed,
        region,
        source_box,
        params,
        query: Some(query),
    })
}

/// A permutation `p` with `keys[p[i]] != keys[i]` for every `i`: no query keeps its
/// own reference. Keys are panorama ids, so two queries cut from one panorama never
/// form a negative with it.
pub fn make_negatives(keys: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    if keys.len() < 2 {
        return Err(Error::invalid(
            "negatives need a batch of at least two positives",
        ));
    }
    let allowed: Vec<Vec<bool>> = keys
        .iter()
        .map(|a| keys.iter().map(|b| a != b).collect())
        .collect();
    random_matching(&allowed, rng)
        .ok_or_else(|| Error::invalid("more than half of the batch shares one panorama"))
}

/// Deterministic street-like panorama: gradient sky, a ring of textured building
/// facades and a ground band. One facade straddles the seam, so the left and right
/// edges join seamlessly. Each window is drawn in one of several colours, which keeps
/// patches of one facade distinguishable from each other.
pub fn procedural_panorama(seed: u64, height: usize, width: usize) -> Result<Image> {
    if height < 8 || width < 16 {
        return Err(Error::invalid(format!(
            "procedural panoramas need at least 8x16 pixels, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let hf = height as f64;
    let mut color = |lo: f64, hi: f64| -> [f64; 3] {
        [
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
        ]
    };
    let sky_top = color(0.2, 0.9);
    let sky_low = sky_top.map(|v| v + 0.5 * (1.0 - v));
    let ground = color(0.1, 0.5);
    let horizon = (hf * rng.gen_range(0.22..0.32)).round() as usize;
    let ground_row = (hf * rng.gen_range(0.80..0.88)).round() as usize;
    let sky_k = rng.gen_range(1..4) as f64;
    let sky_phase = rng.gen_range(0.0..2.0 * PI);
    let ground_k = rng.gen_range(3..9) as f64;
    let ground_phase = rng.gen_range(0.0..2.0 * PI);

    let facades = build_facades(&mut rng, height, width);
    let wf = width as f64;
    Image::from_fn(height, width, 3, |y, x, c| {
        let xc = x as f64 + 0.5;
        if y >= ground_row {
            let t = (y - ground_row) as f64 / (height - ground_row).max(1) as f64;
            let wave = 1.0 + 0.15 * (2.0 * PI * ground_k * xc / wf + ground_phase).cos();
            return ground[c] * (0.8 + 0.4 * t) * wave;
        }
        for f in &facades {
            let u = (x + width - f.start) % width;
            if u < f.width && y >= f.top {
                return f.shade(u, y, c);
            }
        }
        let t = (y as f64 / horizon.max(1) as f64).min(1.0);
        let wave = 1.0 + 0.04 * (2.0 * PI * sky_k * xc / wf + sky_phase).cos();
        (sky_top[c] + t * (sky_low[c] - sky_top[c])) * wave
    })
}

struct Facade {
    start: usize,
    width: usize,
    top: usize,
    base: [f64; 3],
    accent: [f64; 3],
    second: [f64; 3],
    pattern: u8,
    period_x: f64,
    period_y: f64,
    fill_x: f64,
    fill_y: f64,
    /// Horizontal phase of the window grid.
    offset: f64,
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Facade {
    fn shade(&self, u: usize, y: usize, c: usize) -> f64 {
        let dx = u as f64 + 0.5 + self.offset;
        let dy = (y - self.top) as f64 + 0.5;
        if dy < 2.0 {
            return self.base[c] * 0.6;
        }
        let (cx, cy) = (dx / self.period_x, dy / self.period_y);
        let fx = cx.fract() < self.fill_x;
        let fy = cy.fract() < self.fill_y;
        let accent = match self.pattern {
            0 => fx && fy,
            1 => fx,
            2 => fy,
            _ => fx != fy,
        };
        if !accent {
            return self.base[c];
        }
        match splitmix(self.seed ^ ((cx as u64) << 32) ^ cy as u64) % 4 {
            0 => self.accent[c],
            1 => self.second[c],
            2 => self.base[c] * 0.3,
            _ => self.base[c],
        }
    }
}

fn build_facades(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<Facade> {
    let n = rng.gen_range(5..=9).min(width / 8).max(1);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.6..1.4)).collect();
    let total: f64 = weights.iter().sum();
    let mut widths: Vec<usize> = weights
        .iter()
        .map(|w| ((w / total * width as f64).round() as usize).max(2))
        .collect();
    // Even seam facade so its centre falls exactly on the seam.
    widths[0] += widths[0] % 2;
    let used: usize = widths[1..].iter().sum::<usize>() + widths[0];
    let last = n - 1;
    if last > 0 {
        widths[last] = (widths[last] as i64 + width as i64 - used as i64).max(2) as usize;
    } else {
        widths[0] = width;
    }
    let mut start = width - widths[0] / 2;
    let hf = height as f64;
    widths
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let base = [
                rng.gen_range(0.1..0.95),
                rng.gen_range(0.1..0.95),
                rng.gen_range(0.1..0.95),
            ];
            let accent = if rng.gen_bool(0.5) {
                base.map(|v| v * rng.gen_range(0.25..0.55))
            } else {
                base.map(|v| v + (1.0 - v) * rng.gen_range(0.4..0.8))
            };
            let (period_x, fill_x) = (rng.gen_range(4.0..10.0), rng.gen_range(0.35..0.65));
            // The seam lies at u = w / 2 of the first facade; centre a window column there.
            let offset = if i == 0 {
                (0.5 * fill_x * period_x - (w / 2) as f64).rem_euclid(period_x)
            } else {
                0.0
            };
            let f = Facade {
                start: start % width,
                width: w,
                top: (hf * rng.gen_range(0.06..0.4)).round() as usize,
                base,
                accent,
                second: [
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                ],
                pattern: rng.gen_range(0..4),
                period_x,
                period_y: rng.gen_range(4.0..9.0),
                fill_x,
                fill_y: rng.gen_range(0.35..0.65),
                offset,
                seed: rng.gen(),
            };
            start += w;
            f
        })
        .collect()
}

/// Fake but reproducible claimed location for a synthetic panorama.
pub fn synthetic_location(seed: u64, pano_id: usize) -> GeoPoint {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ pano_id as u64);
    GeoPoint {
        lat: rng.gen_range(-60.0..60.0),
        lon: rng.gen_range(-180.0..180.0),
    }
}

/// Panoramas plus positives drawn round-robin over them.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub panoramas: Vec<Image>,
    pub records: Vec<SynthRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub panoramas: usize,
    pub samples: usize,
    pub pano_height: usize,
    pub pano_width: usize,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl SynthDataset {
    pub fn generate(config: &DatasetConfig) -> Result<SynthDataset> {
        if config.panoramas == 0 && config.samples > 0 {
            return Err(Error::invalid("samples need at least one panorama"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pano_seeds: Vec<u64> = (0..config.panoramas).map(|_| rng.gen()).collect();
        let panoramas = pano_seeds
            .iter()
            .map(|&s| procedural_panorama(s, config.pano_height, config.pano_width))
            .collect::<Result<Vec<_>>>()?;
        let records = (0..config.samples)
            .map(|i| {
                let pano_id = i % config.panoramas;
                make_positive(&panoramas[pano_id], pano_id, rng.gen(), &config.synth)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthDataset { panoramas, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(pano: &Image, b: &BoundingBox) -> Image {
        Image::from_fn(b.height, b.width, pano.channels(), |y, x, c| {
            pano.get(b.y0 + y, (b.x0 + x) % pano.width(), c)
        })
        .unwrap()
    }

    #[test]
    fn identity_augment_is_a_crop() {
        let pano = procedural_panorama(3, 64, 128).unwrap();
        for b in [
            BoundingBox {
                x0: 10,
                y0: 5,
                width: 30,
                height: 20,
                wrap: false,
            },
            BoundingBox {
                x0: 120,
                y0: 0,
                width: 16,
                height: 64,
                wrap: true,
            },
        ] {
            let (q, window) =
                augment(&pano, &b, &AugmentParams::identity(), b.height, b.width).unwrap();
            assert_eq!(window, b);
            assert_eq!(q, crop(&pano, &b));
        }
    }

    #[test]
    fn gamma_half_on_quarter_gray() {
        let pano = Image::new(64, 64, 1, vec![0.25; 64 * 64]).unwrap();
        let params = AugmentParams {
            gamma: 0.5,
            ..AugmentParams::identity()
        };
        let b = BoundingBox {
            x0: 0,
            y0: 0,
            width: 16,
            height: 16,
            wrap: false,
        };
        let (q, _) = augment(&pano, &b, &params, 8, 8).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn scale_two_doubles_the_window() {
        let b = BoundingBox {
            x0: 40,
            y0: 20,
            width: 20,
            height: 10,
            wrap: false,
        };
        let params = AugmentParams {
            scale: 2.0,
            ..AugmentParams::identity()
        };
        let w = sample_window(&b, &params, 64, 256);
        assert_eq!((w.x0, w.y0, w.width, w.height), (30, 15, 40, 20));
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let pano = Image::new(64, 64, 1, vec![0.0; 64 * 64]).unwrap();
        let b = BoundingBox {
            x0: 0,
            y0: 0,
            width: 16,
            height: 16,
            wrap: false,
        };
        for p in [
            AugmentParams {
                scale: 2.5,
                ..AugmentParams::identity()
            },
            AugmentParams {
                shift_x: 0.2,
                ..AugmentParams::identity()
            },
            AugmentParams {
                gamma: 0.4,
                ..AugmentParams::identity()
            },
            AugmentParams {
                corners: [[0.11, 0.0], [0.0; 2], [0.0; 2], [0.0; 2]],
                ..AugmentParams::identity()
            },
        ] {
            assert!(augment(&pano, &b, &p, 8, 8).is_err(), "{p:?}");
        }
    }

    #[test]
    fn homography_hits_the_displaced_corners() {
        let corners = [[0.05, -0.02], [-0.07, 0.03], [0.1, 0.09], [-0.01, -0.1]];
        let h = Homography::square_to_quad(&corners);
        for ((u, v), d) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
            .into_iter()
            .zip(corners)
        {
            let (x, y) = h.apply(u, v);
            assert!((x - (u + d[0])).abs() < 1e-12 && (y - (v + d[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_candidate_is_chosen() {
        let only = BoundingBox {
            x0: 3,
            y0: 4,
            width: 10,
            height: 10,
            wrap: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_region(64, 64, Some(&[only]), &mut rng).unwrap(),
            only
        );
        assert!(select_region(32, 128, None, &mut rng).is_err());
    }

    #[test]
    fn block_aligned_box_gives_exact_cells() {
        // Rows 2..=3 and columns 5..=7 at d = 8.
        let b = BoundingBox {
            x0: 40,
            y0: 16,
            width: 24,
            height: 16,
            wrap: false,
        };
        let t = mask_target(&b, 64, 128, 8, 0.5).unwrap();
        assert_eq!(t.count(), 6);
        for r in 2..=3 {
            for c in 5..=7 {
                assert!(t.get(r, c));
            }
        }
        let all = BoundingBox {
            x0: 0,
            y0: 0,
            width: 128,
            height: 64,
            wrap: false,
        };
        assert_eq!(mask_target(&all, 64, 128, 8, 0.5).unwrap().count(), 128);
    }

    #[test]
    fn half_covered_cells_count() {
        let b = BoundingBox {
            x0: 4,
            y0: 0,
            width: 8,
            height: 8,
            wrap: false,
        };
        let t = mask_target(&b, 8, 64, 8, 0.5).unwrap();
        assert!(t.get(0, 0) && t.get(0, 1) && t.count() == 2);
        let seam = BoundingBox {
            x0: 60,
            y0: 0,
            width: 12,
            height: 8,
            wrap: true,
        };
        let t = mask_target(&seam, 8, 64, 8, 0.5).unwrap();
        assert!(t.get(0, 7) && t.get(0, 0) && t.count() == 2);
    }

    #[test]
    fn positives_are_reproducible() {
        let pano = procedural_panorama(5, 64, 256).unwrap();
        let cfg = SynthConfig::default();
        let a = make_positive(&pano, 2, 77, &cfg).unwrap();
        let b = make_positive(&pano, 2, 77, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.query.as_ref().unwrap().height(), 64);
    }

    #[test]
    fn derangements_of_small_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(make_negatives(&[4, 9], &mut rng).unwrap(), vec![1, 0]);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..50 {
            let p = make_negatives(&[0, 1, 2], &mut rng).unwrap();
            assert!(p == vec![1, 2, 0] || p == vec![2, 0, 1], "{p:?}");
            seen.insert(p);
        }
        assert_eq!(seen.len(), 2);
        assert!(make_negatives(&[1], &mut rng).is_err());
        assert!(make_negatives(&[1, 1, 1, 2], &mut rng).is_err());
        let p = make_negatives(&[1, 1, 2, 2], &mut rng).unwrap();
        assert!(p[0] >= 2 && p[1] >= 2 && p[2] < 2 && p[3] < 2);
    }

    #[test]
    fn panoramas_are_deterministic_and_seamless() {
        let a = procedural_panorama(11, 64, 256).unwrap();
        assert_eq!(a, procedural_panorama(11, 64, 256).unwrap());
        let col_diff = |x1: usize, x2: usize| {
            let mut s = 0.0;
            for y in 0..64 {
                for c in 0..3 {
                    s += (a.get(y, x1, c) - a.get(y, x2, c)).abs();
                }
            }
            s / 192.0
        };
        let interior: f64 = (0..255).map(|x| col_diff(x, x + 1)).sum::<f64>() / 255.0;
        assert!(col_diff(255, 0) <= interior);
    }
}
